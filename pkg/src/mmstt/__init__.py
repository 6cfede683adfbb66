"""mmstt: multi-modal spatio-temporal transformer for gridded land-subsidence
forecasting, with its data pipeline, training loop, metrics, and synthetic
deformation regimes."""

__version__ = "0.1.0"
