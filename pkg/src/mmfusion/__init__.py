"""mmfusion: radar + depth fusion for concealed-metal detection.

A self-contained pipeline: FMCW/depth scene simulator, preprocessing,
a dual-encoder fusion network on a minimal autodiff engine, training
recipe, and the centroid-agreement evaluation protocol.
"""

__version__ = "0.1.0"
