"""Desk-scale engine for class-incremental 3D point-cloud anomaly detection.

Pipeline: adaptive grouping of point clouds into fixed-size neighborhoods,
token embedding with random-feature kernel attention (linear in the token
count), an encoder-decoder whose attention reads continually updated
fast-weight advisors, and a parameter-perturbation rehearsal loss that
keeps representations stable across tasks. Anomalies are scored by token
reconstruction error.
"""

__version__ = "0.1.0"
