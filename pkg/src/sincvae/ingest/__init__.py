"""Dataset adapters: Bonn text segments, EDF files, annotation CSV, synthetic data."""
from .edf import (
    EdfError, EdfHeader, EdfHeaderError, EdfSignal, EdfTruncatedError, EdfUnsupportedError,
    header_for, parse_header, read_edf, read_edf_header, write_edf,
)
from .synth import SynthSpec, label_windows, synth_generate
from .text import BONN_FS, SeizureAnnotation, read_annotations, read_bonn, read_bonn_file, write_annotations

__all__ = [
    "BONN_FS", "EdfError", "EdfHeader", "EdfHeaderError", "EdfSignal", "EdfTruncatedError",
    "EdfUnsupportedError", "SeizureAnnotation", "SynthSpec", "header_for", "label_windows",
    "parse_header", "read_annotations", "read_bonn", "read_bonn_file", "read_edf",
    "read_edf_header", "synth_generate", "write_annotations", "write_edf",
]
