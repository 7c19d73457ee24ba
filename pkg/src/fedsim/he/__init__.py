from .ckks import (
    Ciphertext,
    CkksContext,
    DecryptionError,
    DepthExceededError,
    KeyPair,
    PublicKey,
    SchemeParams,
    SecretKey,
    add,
    decrypt,
    encrypt,
    keygen,
    multiply_scalar,
    rescale,
    toy_params,
)

__all__ = [
    "Ciphertext",
    "CkksContext",
    "DecryptionError",
    "DepthExceededError",
    "KeyPair",
    "PublicKey",
    "SchemeParams",
    "SecretKey",
    "add",
    "decrypt",
    "encrypt",
    "keygen",
    "multiply_scalar",
    "rescale",
    "toy_params",
]
