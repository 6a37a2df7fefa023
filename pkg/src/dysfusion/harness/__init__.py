"""Dataset manifests, split protocols, the synthetic corpus and report aggregation."""
