"""Desk-scale IoT-fog framework for urban sound sensing.

Modules: ``audio`` (WAV I/O, framing, synthetic corpus), ``features``
(193-dim spectral features), ``classifier`` (MLP), ``placement`` (stage to
tier presets), ``power`` (device power states), ``wire`` (protocol and
transports), ``sim`` (discrete-event experiments) and ``cli``.
"""

__version__ = "0.1.0"
