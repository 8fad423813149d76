"""fastfista - FISTA-family proximal gradient solvers."""
