"""Scalable linearized Laplace posteriors for neural networks via Nystrom NTK features."""
