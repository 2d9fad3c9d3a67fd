"""RGB/IR open-world detection building blocks in plain numpy.

Modules: ``biwkv`` (bidirectional WKV kernel), ``fusion`` (RGB/IR fusion
block and multi-scale merge), ``crossmodal`` (image/text exchange),
``sampling`` (text-modulated deformable sampling), ``contrast`` (momentum
contrast), ``ema`` (EMA bound checks), ``curriculum`` (two-stage toy
training) and ``cli``.
"""
__version__ = "0.1.0"
