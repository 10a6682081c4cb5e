"""musq: synthetic muscle-ultrasound state regression.

Generates speckle image sequences with known motion driven by a muscle-like
plant, then trains and compares two per-frame state predictors: pyramidal
KLT feature tracking feeding a fully connected network, and a convolutional
network on raw two-frame input.
"""

__version__ = "0.1.0"
