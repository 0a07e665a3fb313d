"""Sparse static output-feedback synthesis for coupled linear agent networks.

Certifies network stability through dissipativity budgets of the individual
agents and of the static couplings introduced by the controller, and trades
closed-loop performance against the number of communication links.
"""

__version__ = "0.1.0"
