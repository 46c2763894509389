"""Deterministic cell-level simulator for explicit-rate flow control on
point-to-multipoint, multipoint-to-point and multipoint-to-multipoint
connections, with a max-min fairness oracle and a bit-exact RM cell codec."""

__version__ = "0.1.0"
