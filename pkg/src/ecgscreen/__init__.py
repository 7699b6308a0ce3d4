"""ICD-wide ECG screening pipeline.

Synthesize or ingest 12-lead ECG cohorts linked to ICD-10 coded
episodes, train a residual 1D convolutional multi-label classifier, and
run a two-stage label selection and external replication protocol.
"""

__version__ = "0.1.0"
