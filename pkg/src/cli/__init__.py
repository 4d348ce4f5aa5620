"""Command line entry points for running, verifying and sweeping scenarios."""
