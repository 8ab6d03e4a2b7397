"""Emotion strength assessment: relative-attribute labelling plus a multi-task CNN-BiLSTM predictor."""

__version__ = "0.1.0"
