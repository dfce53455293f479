"""Test-time-trained photorealistic style transfer.

The package optimizes a freshly initialized decoder (and fine-tunes an
encoder) against a single content/style image pair at inference time; no
offline training is involved.  Import submodules directly::

    from dtp.pipeline import DtpConfig, run_dtp

The top-level module stays import-light on purpose: the command line entry
point must be able to cap BLAS thread counts before numpy is loaded.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
