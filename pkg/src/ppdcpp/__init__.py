"""Historical borrowing with congruence-calibrated power priors."""

__version__ = "0.1.0"
