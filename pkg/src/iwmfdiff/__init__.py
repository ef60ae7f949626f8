"""Randomised window-mean purification against adversarial face impersonation.

Modules: ``core`` (tensors, RNG, image I/O), ``filters`` (IWMF and other
blurs), ``diffusion`` (corruption plus reverse chain), ``verifier`` (toy
embedding model), ``attacks``, ``metrics`` and ``evaluation`` (rates and the
protocol), ``bench`` and ``cli``.
"""

__version__ = "0.1.0"
