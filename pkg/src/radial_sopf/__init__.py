"""Multistage stochastic optimal power flow on radial feeders.

Second-order cone relaxation, a restricted variant with loss-free flow
bounds, forward-backward sweep recovery of exact flows, and a-priori /
a-posteriori relaxation-gap certificates.
"""

__version__ = "0.1.0"
