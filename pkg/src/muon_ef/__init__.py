"""Communication-efficient non-Euclidean LMO optimizer with bidirectional
error feedback, a deterministic simulated-cluster harness, and verification
oracles for every closed-form identity and contraction bound it relies on."""

from . import compressors, harness, lmo, optimizer, problems, tensorcore, verify  # noqa: F401

__version__ = "0.1.0"
