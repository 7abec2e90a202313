"""Desk-scale video-to-language toolkit.

Concept word detection from spatial feature grids, semantic-attention
language heads for captioning, fill-in-the-blank, multiple-choice and
retrieval, with the training, evaluation and data tooling needed to
exercise all of it on synthetic corpora.
"""

__version__ = "0.1.0"
