"""Training fixture models and evaluating them against their expansions."""
