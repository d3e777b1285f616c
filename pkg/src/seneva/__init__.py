"""Variational Bayes mixture model for single-agent trajectory prediction."""
