"""Entity encoders pre-trained on consensus coreference chains.

A self-contained pipeline: synthesize annotated story corpora, merge
two coreference systems' chains into a low-noise consensus, pre-train a
compact transformer encoder with a contrastive objective over the
consensus chains, then train entity-typing and span-detection heads on
top and score them.
"""

__version__ = "0.1.0"
