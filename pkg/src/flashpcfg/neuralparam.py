"""Trainable parameterizations that produce a :class:`SimpleGrammar`.

Two parameterizations share one training interface: an embedding-based
one, where every rule distribution is a softmax over scores computed
from symbol embeddings through small residual networks, and a direct
one, where the score tables themselves are the parameters.  Both come
with exact manual reverse-mode gradients and a bias-corrected Adam
update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grammar import GrammarDims, GrammarGrad, SimpleGrammar, _Reader

PARAM_MAGIC = b"SPRM1"


class ParamError(Exception):
    """Invalid parameters or a non-finite value during the forward pass."""


class ParamFileError(ParamError):
    """Malformed parameter checkpoint."""


def _xavier(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_out, n_in))


def _embedding(rng: np.random.Generator, rows: int, d: int) -> np.ndarray:
    return rng.standard_normal((rows, d)) / np.sqrt(d)


@dataclass
class EmbeddingParams:
    """Named parameter tensors of the embedding parameterization.

    ``w_sym`` holds one embedding row per symbol with the start symbol
    in row 0, nonterminals in rows 1..n_nt, preterminals after them.
    ``u_nt`` and ``u_voc`` are the output embeddings scoring root and
    emission rules.  The remaining tensors are the weights of the score
    networks: f1 and f5 are two-layer residual blocks applied twice,
    f2, f3 and f4 are single relu layers with a residual connection,
    and f3 (applied to the parent) is shared between the left-child and
    right-child scores.
    """

    dims: GrammarDims
    d: int
    tensors: dict[str, np.ndarray]

    @property
    def w_sym(self) -> np.ndarray:
        return self.tensors["w_sym"]

    @property
    def u_nt(self) -> np.ndarray:
        return self.tensors["u_nt"]

    @property
    def u_voc(self) -> np.ndarray:
        return self.tensors["u_voc"]


def _tensor_shapes(dims: GrammarDims, d: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {
        "w_sym": (1 + dims.n_nt + dims.n_pt, d),
        "u_nt": (dims.n_nt, d),
        "u_voc": (dims.vocab_size, d),
    }
    for name in ("f1", "f5"):
        for layer in ("w1", "w2", "w3", "w4"):
            shapes[f"{name}.{layer}"] = (d, d)
        for bias in ("b1", "b2", "b3", "b4"):
            shapes[f"{name}.{bias}"] = (d,)
    for name in ("f2", "f3", "f4"):
        shapes[f"{name}.w"] = (d, d)
        shapes[f"{name}.b"] = (d,)
    return shapes


def init_params(dims: GrammarDims, d: int = 512, seed: int = 0) -> EmbeddingParams:
    """Draw fresh parameters: Xavier-normal weights, scaled-normal embeddings.

    Biases start at zero.  Deterministic per seed.
    """
    if d < 2:
        raise ParamError(f"embedding dimension must be at least 2, got {d}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _tensor_shapes(dims, d).items():
        if name in ("w_sym", "u_nt", "u_voc"):
            tensors[name] = _embedding(rng, shape[0], d)
        elif len(shape) == 2:
            tensors[name] = _xavier(rng, *shape)
        else:
            tensors[name] = np.zeros(shape)
    return EmbeddingParams(dims, d, tensors)


def _relu_residual(x, w, b):
    # f2/f3/f4 block: relu(W x + b) + x, returns the pre-activation for backward
    z = x @ w.T + b
    return np.maximum(z, 0.0) + x, z


def _relu_residual_backward(dy, x, z, w):
    dz = np.where(z > 0.0, dy, 0.0)
    return dy + dz @ w, dz.T @ x, dz.sum(axis=0)


def _two_layer(x, w1, b1, w2, b2):
    # one residual block of f1/f5: x + W2 relu(W1 x + b1) + b2
    z = x @ w1.T + b1
    h = np.maximum(z, 0.0)
    return x + h @ w2.T + b2, z, h


def _two_layer_backward(dy, x, z, h, w1, w2):
    dw2 = dy.T @ h
    db2 = dy.sum(axis=0)
    dz = np.where(z > 0.0, dy @ w2, 0.0)
    dw1 = dz.T @ x
    db1 = dz.sum(axis=0)
    return dy + dz @ w1, dw1, db1, dw2, db2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def _log_softmax_backward(d_logp: np.ndarray, log_p: np.ndarray) -> np.ndarray:
    return d_logp - np.exp(log_p) * d_logp.sum(axis=-1, keepdims=True)


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise ParamError(f"non-finite activation in {name}")


class _Forward:
    """One forward pass with every intermediate kept for backward."""

    def __init__(self, p: EmbeddingParams, tied: bool):
        t = p.tensors
        dims = p.dims
        self.p, self.tied = p, tied
        self.x_start = t["w_sym"][0:1]
        self.x_nt = t["w_sym"][1:1 + dims.n_nt]
        self.x_child = t["w_sym"][1:]
        self.x_pt = t["w_sym"][1 + dims.n_nt:]

        h, self.f1_z1, self.f1_h1 = _two_layer(
            self.x_start, t["f1.w1"], t["f1.b1"], t["f1.w2"], t["f1.b2"])
        self.f1_mid = h
        self.f1_out, self.f1_z2, self.f1_h2 = _two_layer(
            h, t["f1.w3"], t["f1.b3"], t["f1.w4"], t["f1.b4"])
        _check_finite("f1", self.f1_out)

        self.f3_out, self.f3_z = _relu_residual(self.x_nt, t["f3.w"], t["f3.b"])
        self.f2_out, self.f2_z = _relu_residual(self.x_child, t["f2.w"], t["f2.b"])
        _check_finite("f2", self.f2_out)
        _check_finite("f3", self.f3_out)
        if not tied:
            self.f4_out, self.f4_z = _relu_residual(
                self.x_child, t["f4.w"], t["f4.b"])
            _check_finite("f4", self.f4_out)

        h, self.f5_z1, self.f5_h1 = _two_layer(
            self.x_pt, t["f5.w1"], t["f5.b1"], t["f5.w2"], t["f5.b2"])
        self.f5_mid = h
        self.f5_out, self.f5_z2, self.f5_h2 = _two_layer(
            h, t["f5.w3"], t["f5.b3"], t["f5.w4"], t["f5.b4"])
        _check_finite("f5", self.f5_out)

        self.log_root = _log_softmax((self.f1_out @ t["u_nt"].T)[0])
        self.log_left = _log_softmax(self.f3_out @ self.f2_out.T)
        if tied:
            self.log_right = self.log_left
        else:
            self.log_right = _log_softmax(self.f3_out @ self.f4_out.T)
        self.log_emit = _log_softmax(self.f5_out @ t["u_voc"].T)

    def grammar(self) -> SimpleGrammar:
        return SimpleGrammar(self.p.dims, self.log_root, self.log_left,
                             self.log_right, self.log_emit, tied=self.tied)


def forward_grammar(params: EmbeddingParams, tied: bool = False) -> SimpleGrammar:
    """Produce the grammar defined by the current parameters.

    Root rows come from scoring nonterminal output embeddings against
    f1 of the start embedding; left and right child rows score f2 and
    f4 of every child embedding against the shared f3 of the parent;
    emission rows score vocabulary output embeddings against f5 of the
    preterminal.  With ``tied`` the right table reuses the left head's
    output verbatim.
    """
    return _Forward(params, tied).grammar()


@dataclass
class ParamGrad:
    """Gradients mirroring the parameter tensors by name."""

    tensors: dict[str, np.ndarray]

    @staticmethod
    def zeros_like(params: EmbeddingParams) -> "ParamGrad":
        return ParamGrad({k: np.zeros_like(v) for k, v in params.tensors.items()})

    def add_(self, other: "ParamGrad") -> None:
        for k, v in other.tensors.items():
            self.tensors[k] += v

    def scale_(self, factor: float) -> None:
        for v in self.tensors.values():
            v *= factor

    def global_norm(self) -> float:
        total = 0.0
        for v in self.tensors.values():
            total += float(np.square(v).sum())
        return float(np.sqrt(total))

    def clip_global_norm_(self, max_norm: float) -> float:
        """Scale all tensors so the joint norm is at most ``max_norm``."""
        norm = self.global_norm()
        if norm > max_norm:
            self.scale_(max_norm / norm)
        return norm


def backward_params(params: EmbeddingParams, grammar_grad: GrammarGrad,
                    tied: bool = False) -> ParamGrad:
    """Reverse-mode gradients of a grammar-level loss through all layers.

    ``grammar_grad`` holds loss gradients with respect to the log
    tables, the forward is recomputed, and the chain runs back through
    each softmax, the bilinear scores, the residual blocks, and into
    the embeddings.  For a tied grammar the left and right table
    gradients both flow through the single left-side head.
    """
    f = _Forward(params, tied)
    t = params.tensors
    dims = params.dims
    for name, got, want in (
            ("root", grammar_grad.d_root.shape, f.log_root.shape),
            ("left", grammar_grad.d_left.shape, f.log_left.shape),
            ("emit", grammar_grad.d_emit.shape, f.log_emit.shape)):
        if got != want:
            raise ParamError(f"{name} gradient shape {got} does not match {want}")
    g = ParamGrad.zeros_like(params)
    gt = g.tensors

    d_root_logits = _log_softmax_backward(grammar_grad.d_root, f.log_root)
    if tied:
        d_left_logits = _log_softmax_backward(
            grammar_grad.d_left + grammar_grad.d_right, f.log_left)
        d_right_logits = None
    else:
        d_left_logits = _log_softmax_backward(grammar_grad.d_left, f.log_left)
        d_right_logits = _log_softmax_backward(grammar_grad.d_right, f.log_right)
    d_emit_logits = _log_softmax_backward(grammar_grad.d_emit, f.log_emit)

    # root: logits = (f1_out @ u_nt.T)[0]
    d_f1_out = d_root_logits[None, :] @ t["u_nt"]
    gt["u_nt"] += np.outer(d_root_logits, f.f1_out[0])
    d_mid, dw, db, dw2, db2 = _two_layer_backward(
        d_f1_out, f.f1_mid, f.f1_z2, f.f1_h2, t["f1.w3"], t["f1.w4"])
    gt["f1.w3"] += dw; gt["f1.b3"] += db
    gt["f1.w4"] += dw2; gt["f1.b4"] += db2
    d_start, dw, db, dw2, db2 = _two_layer_backward(
        d_mid, f.x_start, f.f1_z1, f.f1_h1, t["f1.w1"], t["f1.w2"])
    gt["f1.w1"] += dw; gt["f1.b1"] += db
    gt["f1.w2"] += dw2; gt["f1.b2"] += db2

    # child scores: left logits = f3_out @ f2_out.T, right from f4
    d_f3 = d_left_logits @ f.f2_out
    d_f2 = d_left_logits.T @ f.f3_out
    if d_right_logits is not None:
        d_f3 += d_right_logits @ f.f4_out
        d_f4 = d_right_logits.T @ f.f3_out
        d_child_r, dw, db = _relu_residual_backward(
            d_f4, f.x_child, f.f4_z, t["f4.w"])
        gt["f4.w"] += dw; gt["f4.b"] += db
    else:
        d_child_r = None
    d_nt, dw, db = _relu_residual_backward(d_f3, f.x_nt, f.f3_z, t["f3.w"])
    gt["f3.w"] += dw; gt["f3.b"] += db
    d_child, dw, db = _relu_residual_backward(d_f2, f.x_child, f.f2_z, t["f2.w"])
    gt["f2.w"] += dw; gt["f2.b"] += db
    if d_child_r is not None:
        d_child += d_child_r

    # emission: logits = f5_out @ u_voc.T
    d_f5_out = d_emit_logits @ t["u_voc"]
    gt["u_voc"] += d_emit_logits.T @ f.f5_out
    d_mid, dw, db, dw2, db2 = _two_layer_backward(
        d_f5_out, f.f5_mid, f.f5_z2, f.f5_h2, t["f5.w3"], t["f5.w4"])
    gt["f5.w3"] += dw; gt["f5.b3"] += db
    gt["f5.w4"] += dw2; gt["f5.b4"] += db2
    d_pt, dw, db, dw2, db2 = _two_layer_backward(
        d_mid, f.x_pt, f.f5_z1, f.f5_h1, t["f5.w1"], t["f5.w2"])
    gt["f5.w1"] += dw; gt["f5.b1"] += db
    gt["f5.w2"] += dw2; gt["f5.b2"] += db2

    gt["w_sym"][0:1] += d_start
    gt["w_sym"][1:1 + dims.n_nt] += d_nt
    gt["w_sym"][1:] += d_child
    gt["w_sym"][1 + dims.n_nt:] += d_pt
    return g


@dataclass
class AdamState:
    """First and second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def zeros(tensors: dict[str, np.ndarray]) -> "AdamState":
        return AdamState({k: np.zeros_like(x) for k, x in tensors.items()},
                         {k: np.zeros_like(x) for k, x in tensors.items()})


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 0.002, beta1: float = 0.75,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied to the tensors in place."""
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise ParamError(f"non-finite gradient for {name}")
    state.t += 1
    correct1 = 1.0 - beta1 ** state.t
    correct2 = 1.0 - beta2 ** state.t
    for name, x in tensors.items():
        grad = grads[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * np.square(grad)
        x -= lr * (m / correct1) / (np.sqrt(v / correct2) + eps)


@dataclass
class DirectLogits:
    """Raw score tables softmaxed row-wise into a grammar."""

    dims: GrammarDims
    root: np.ndarray
    left: np.ndarray
    right: np.ndarray
    emit: np.ndarray

    @property
    def tensors(self) -> dict[str, np.ndarray]:
        return {"root": self.root, "left": self.left,
                "right": self.right, "emit": self.emit}


def init_direct(dims: GrammarDims, seed: int = 0, scale: float = 0.5) -> DirectLogits:
    # nonzero scale breaks the symmetry of the uniform fixed point
    rng = np.random.default_rng(seed)
    return DirectLogits(
        dims,
        scale * rng.standard_normal(dims.n_nt),
        scale * rng.standard_normal((dims.n_nt, dims.n_sym)),
        scale * rng.standard_normal((dims.n_nt, dims.n_sym)),
        scale * rng.standard_normal((dims.n_pt, dims.vocab_size)))


def forward_grammar_direct(logits: DirectLogits, tied: bool = False) -> SimpleGrammar:
    log_left = _log_softmax(logits.left)
    log_right = log_left if tied else _log_softmax(logits.right)
    return SimpleGrammar(logits.dims, _log_softmax(logits.root), log_left,
                         log_right, _log_softmax(logits.emit), tied=tied)


def backward_direct(logits: DirectLogits, grammar_grad: GrammarGrad,
                    tied: bool = False) -> DirectLogits:
    """Softmax backward for each table; gradients share the logit shapes."""
    log_left = _log_softmax(logits.left)
    if tied:
        d_left = _log_softmax_backward(
            grammar_grad.d_left + grammar_grad.d_right, log_left)
        d_right = np.zeros_like(logits.right)
    else:
        d_left = _log_softmax_backward(grammar_grad.d_left, log_left)
        d_right = _log_softmax_backward(
            grammar_grad.d_right, _log_softmax(logits.right))
    return DirectLogits(
        logits.dims,
        _log_softmax_backward(grammar_grad.d_root, _log_softmax(logits.root)),
        d_left, d_right,
        _log_softmax_backward(grammar_grad.d_emit, _log_softmax(logits.emit)))


def save_params(params: EmbeddingParams, path: str | Path) -> None:
    """Write the named-tensor checkpoint (bit-exact round trip)."""
    dims = params.dims
    parts = [PARAM_MAGIC,
             struct.pack("<QQQQQ", dims.n_nt, dims.n_pt, dims.vocab_size,
                         params.d, len(params.tensors))]
    for name, tensor in params.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path: str | Path) -> EmbeddingParams:
    data = Path(path).read_bytes()
    r = _Reader(data, error=ParamFileError)
    if r.take(len(PARAM_MAGIC), "magic") != PARAM_MAGIC:
        raise ParamFileError("not a parameter checkpoint (bad magic)")
    n_nt = r.u64("n_nt")
    n_pt = r.u64("n_pt")
    vocab = r.u64("vocab_size")
    d = r.u64("embedding dim")
    count = r.u64("tensor count")
    try:
        dims = GrammarDims(n_nt, n_pt, vocab)
    except Exception as exc:
        raise ParamFileError(f"bad header dimensions: {exc}") from exc
    expected = _tensor_shapes(dims, d)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.u64("tensor name length")
        if name_len > 1 << 16:
            raise ParamFileError(f"implausible tensor name length {name_len}")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        ndim = r.u64(f"rank of {name}")
        if ndim > 8:
            raise ParamFileError(f"implausible rank {ndim} for {name}")
        shape = tuple(r.u64(f"shape of {name}") for _ in range(ndim))
        if name not in expected:
            raise ParamFileError(f"unknown tensor {name!r}")
        if shape != expected[name]:
            raise ParamFileError(
                f"tensor {name!r} has shape {shape}, expected {expected[name]}")
        tensors[name] = r.f64_array(shape, f"data of {name}")
    r.done("parameter checkpoint")
    missing = set(expected) - set(tensors)
    if missing:
        raise ParamFileError(f"checkpoint is missing tensors: {sorted(missing)}")
    return EmbeddingParams(dims, d, {k: tensors[k] for k in expected})
