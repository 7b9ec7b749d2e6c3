"""Realism metrics: lane-graph features, distributional divergences, collisions."""
