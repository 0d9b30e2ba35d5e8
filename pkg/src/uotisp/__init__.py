"""Unbalanced optimal transport training for raw-to-sRGB translation.

A generator ("transport network") is trained against a scalar potential
network and a committee of expert discriminators (color / structure /
frequency).  The package ships a synthetic camera pipeline, the full
alternating training loop, image metrics, a 2D point-cloud verification
bed with exact discrete OT/UOT oracles, and an experiment runner that
reproduces framework/committee ablations and the outlier-robustness
study at desk scale.
"""

__version__ = "0.1.0"
