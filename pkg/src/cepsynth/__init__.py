"""Pitch-conditioned parametric synthesis of instrumental tones.

Notes are analysed into f0 plus a cepstrally coded True Amplitude Envelope,
a (conditional variational) autoencoder is trained on the padded cepstral
coefficients, and new notes are rendered by decoding latent trajectories and
driving an additive oscillator bank.
"""

__version__ = "0.1.0"

PAD_WIDTH = 91
DEFAULT_SAMPLE_RATE = 48000
DEFAULT_FRAME_LEN = 1024
DEFAULT_HOP = 256
DEFAULT_FFT_SIZE = 2048
