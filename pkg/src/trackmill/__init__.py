"""trackmill: learn re-ID pseudo labels from noisy tracklets."""
