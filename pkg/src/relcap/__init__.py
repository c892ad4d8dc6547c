"""Geometry-gated transformer captioning over box-annotated scenes.

The package is organised as:

    tensor       dense arrays with reverse-mode autodiff and grad checking
    geometry     pairwise box displacement features and learned gates
    model        encoder-decoder captioner with gated encoder attention
    training     Adam + warmup schedule, early stopping, run logs
    decoding     greedy and beam-search caption generation
    metrics      BLEU / ROUGE-L / CIDEr-D, spatial accuracy, paired t-tests
    data         synthetic corpus, vocabulary, feature/checkpoint formats
    experiments  multi-variant ablation harness
    cli          command-line workflows
"""

__version__ = "0.1.0"
