"""Wire schemas for datasets, reports and checkpoints."""
