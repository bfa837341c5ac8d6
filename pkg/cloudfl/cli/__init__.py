"""Command-line front end (see cloudfl.main for the argument parser)."""
