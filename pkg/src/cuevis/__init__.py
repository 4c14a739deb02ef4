"""Visualising the 3D cues a spacecraft pose estimator relies on.

A NeRF image generator is trained only through the losses of a frozen pose
estimator; whatever it learns to render is what the estimator looks at.
"""
__version__ = "0.1.0"
