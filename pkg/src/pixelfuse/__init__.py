"""pixelfuse: a desk-scale encoder-free unified multimodal model.

One transformer reads text tokens and raw image patches. Text is produced by a
language-modelling head trained with cross-entropy; images are produced by a
flow head that predicts clean pixels and is trained with a velocity loss along
a straight noise-to-data path.
"""

__version__ = "0.1.0"
