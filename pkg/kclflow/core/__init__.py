"""Domain modules: grid model, case ingest, power flow, datasets, projection, surrogate, training."""
