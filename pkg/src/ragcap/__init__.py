"""Retrieval-augmented caption generation.

An audio-similarity retrieval encoder trained with caption-similarity
supervised triplet loss, and a frozen-language-model fusion decoder that
generates captions conditioned on retrieved guidance captions, plus
training, generation, and evaluation tooling.
"""

__version__ = "0.1.0"
