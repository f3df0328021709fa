"""Coverless image steganography over a learned noisy channel.

A secret image is hidden inside a freshly generated stego image by running
deterministic diffusion trajectories conditioned on a private/public key
pair, transmitted through a joint source-channel codec plus AWGN, and
recovered only by a receiver holding both keys.
"""

__version__ = "0.1.0"
