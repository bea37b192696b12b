"""Two-stage pulmonary embolism detection on synthetic chest CT.

The pipeline mirrors a clinical CAD workflow at desk scale: Hounsfield-unit
volumes are windowed and cropped to the lungs, a convolutional or transformer
backbone scores each slice triplet, and an exam-level head aggregates the
per-slice feature sequence into nine study labels.  A benchmark harness runs
seeded multi-arm experiments and renders comparison reports.
"""

__version__ = "0.1.0"
