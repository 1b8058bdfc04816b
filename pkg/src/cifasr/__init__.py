"""CIF-based speech recognizer with modality matching and text-only domain adaptation.

Everything runs on a small numpy reverse-mode autodiff engine (``cifasr.tensor``).
"""

__version__ = "0.1.0"
