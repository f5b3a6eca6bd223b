"""Prior-guided radial state-space scanning for lens flare removal.

Desk-scale library plus CLI: dense-array primitives with hand-written
gradients, radial serialization of image tokens, a prior-excited selective
scan with source-token bypass, procedural scene synthesis, losses, metrics,
and a two-stage toy trainer.
"""

__version__ = "0.1.0"
