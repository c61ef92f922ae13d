"""Weakly supervised audio-visual dense event captioning on synthetic data."""

__all__ = ["DenseEventCaptioner", "MfccExtractor", "CqtExtractor"]
__version__ = "0.1.0"


def __getattr__(name):
    if name in __all__:
        from avdec import model

        return getattr(model, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
