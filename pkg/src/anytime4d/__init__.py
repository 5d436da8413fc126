"""Conditional-query 4D reconstruction: encode a video once, then query base geometry
and displacement for any (source frame, target time) pair.

Modules: geometry, representation, scenegen, model, streaming, training,
inference, evalmetrics, archive, export, config, cli.
"""

__version__ = "0.1.0"
