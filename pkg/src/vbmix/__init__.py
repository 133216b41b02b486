"""Empirical-Bayes Gaussian mixtures with missing channels for image translation."""
