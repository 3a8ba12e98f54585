"""Meta-transfer learning for low-resource abstractive summarization.

An adapter-augmented transformer encoder-decoder whose adapter and
layer-normalization parameters are meta-trained with MAML over tasks
sampled from multiple source corpora, then fine-tuned on a small target
corpus. Everything runs on a small numpy-backed reverse-mode autodiff
engine so gradients are exact and checkable.
"""

__version__ = "0.1.0"
