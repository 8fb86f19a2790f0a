"""Deep joint source-channel coding for wireless video transmission with
asymmetric-context conditional coding, feature propagation, and
entropy-guided variable-bandwidth channel masking."""

__version__ = "0.1.0"
