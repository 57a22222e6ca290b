"""Grammar induction with simple PCFGs: fused inside algorithm,
recomputation-based gradients, neural and direct parameterizations,
training, language-modeling and parsing evaluation, and a low-rank
grammar baseline."""

__version__ = "0.1.0"
