"""Teacher-student intrusion detection: SHAP-guided feature pruning, Kronecker
students, knowledge distillation and int8 weight quantization."""

__version__ = "0.1.0"
