"""surfelflow: differentiable surfel-Gaussian rendering plus a cascaded
point-latent flow-matching pipeline, on a self-contained numpy tape engine."""

__version__ = "0.1.0"
