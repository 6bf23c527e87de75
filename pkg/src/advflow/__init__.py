"""Adversarial network-flow generation against feature-based classifiers.

Couples feature-space attacks (gradient and gradient-free) with an exact
integer constraint solver so that adversarial feature vectors become
real packet sequences that respect an attacker capability envelope, then
uses the generated sequences to harden the classifiers.
"""

__version__ = "0.1.0"
