"""FedLGA Sim test package."""
