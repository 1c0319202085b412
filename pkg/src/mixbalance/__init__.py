"""Training toolkit for class-imbalanced classification with uncertainty-weighted feature mixing."""
