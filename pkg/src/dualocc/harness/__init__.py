"""Dataset building, training, evaluation, ablation, benchmarking and plotting."""
