"""Cross-lingual speech emotion recognition with pseudo-label based
semi-supervised adaptation.

Subpackage layout:

- ``corpus``      manifests, emotion taxonomy, speaker-independent splits
- ``audio``       WAV decoding, resampling, fixed-length crops
- ``features``    log-mel spectrograms, feature caches, feature sources
- ``model``       encoder + linear classifier with analytic gradients
- ``semisup``     losses, pseudo-labels, mixup, hybrid batches
- ``trainer``     Adam optimization loop and history bookkeeping
- ``evaluation``  unweighted accuracy, confusion matrices, synthetic benchmark
- ``experiments`` experiment runners and report emission
- ``plots``       figure rendering for emitted reports
- ``cli``         command-line front end
"""

__version__ = "0.1.0"
