"""Joint audio-visual generation with flow matching, at desk scale.

Subpackages and modules:

- ``avflow.ndgrad``: reverse-mode autodiff on numpy arrays
- ``avflow.avdit``: the audio-visual diffusion transformer
- ``avflow.flowmatch``: conditional flow matching loss and Euler sampling
- ``avflow.codecs``: token, head-pose and lip-geometry codecs
- ``avflow.synthcorpus``: synthetic dyadic corpus and its file format
- ``avflow.texttokens``: text to token-logit front end
- ``avflow.metrics``: evaluation battery
- ``avflow.harness``: training, evaluation and ablation runs
"""

__version__ = "0.1.0"
