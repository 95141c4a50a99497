"""Robust decentralized nonlinear MPC for multi-agent navigation.

Subpackages: ball set algebra and tube radii (`setalg`), agent models and
integrators (`dynamics`), constraint construction and tightening
(`constraints`), the per-agent finite-horizon solver (`ocp`), the sequential
closed-loop engine (`coordination`), analytic certificates and log
verification (`certify`), and the command-line interface (`cli`).
"""

__version__ = "0.1.0"
