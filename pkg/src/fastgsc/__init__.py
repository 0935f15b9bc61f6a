"""Desk-scale pipeline simulator for generative semantic communication.

Subpackages cover the semantic-unit domain types, the synthetic world and
its analytic score oracle, the conditional diffusion core, latency
timelines, the transmission-order learner, and the experiment runner.
"""

__version__ = "0.1.0"
