"""Core of Monotone Track: convex sets, the plant contract, the closed-loop integrator and the checks."""
