"""Multi-speaker text-to-speech built on numpy: mel prediction, an
autoregressive sample-level vocoder, speaker embedding, and the training,
adaptation and evaluation tooling around them."""

__version__ = "0.1.0"
