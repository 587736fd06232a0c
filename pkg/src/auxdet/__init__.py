"""Set-prediction detection training sandbox with multi-teacher auxiliary
box supervision: independent per-teacher Hungarian matchings whose losses
are weighted by the teachers' confidence scores and summed with the
ground-truth branch."""

__version__ = "0.1.0"
