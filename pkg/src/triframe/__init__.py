"""Multi-frame CNN post-processing for decoded video."""
