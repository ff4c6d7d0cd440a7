"""Logistic regression, sketched polynomial SVM, and the two-branch network."""

from .dnn import DEFAULT_FUSION, Fusion, Sampling, TwoBranchDNN, dnn_build, dnn_predict, dnn_train
from .logistic import LogisticModel, lr_predict_proba, lr_train
from .svm import BadDegree, SketchSVM, TensorSketch, poly_kernel, sketch_fit, svm_predict_proba, svm_train

__all__ = [
    "DEFAULT_FUSION",
    "BadDegree",
    "Fusion",
    "LogisticModel",
    "Sampling",
    "SketchSVM",
    "TensorSketch",
    "TwoBranchDNN",
    "dnn_build",
    "dnn_predict",
    "dnn_train",
    "lr_predict_proba",
    "lr_train",
    "poly_kernel",
    "sketch_fit",
    "svm_predict_proba",
    "svm_train",
]
