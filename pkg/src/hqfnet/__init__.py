"""Hybrid quantum-classical semantic segmentation toolkit.

Built on an in-package autodiff tensor engine and an exact statevector
simulator for parameterized circuits; runnable end to end at desk scale.
"""

__version__ = "0.1.0"
