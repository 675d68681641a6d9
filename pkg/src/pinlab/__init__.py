"""pinlab: positional-insert training against a frozen toy vision-language model."""
import os as _os

# tiny matrices: BLAS threading costs more than it buys (set before numpy loads)
_os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"
