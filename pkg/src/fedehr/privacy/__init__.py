from .crypto import (
    PseudonymityService,
    decrypt_record,
    derive_patient_key,
    encrypt_record,
)
from .dp import DPConfig, dp_perturb_column, laplace_sample, observed_range
from .pseudonym import Pseudonym, pseudonymize_column, pseudonymize_ssn, sha256_digest
from .watermark import (
    WatermarkTag,
    agreement,
    detect_watermark,
    embed_watermark,
    read_registry,
    write_registry,
)

__all__ = [
    "DPConfig",
    "Pseudonym",
    "PseudonymityService",
    "WatermarkTag",
    "agreement",
    "decrypt_record",
    "derive_patient_key",
    "detect_watermark",
    "dp_perturb_column",
    "embed_watermark",
    "encrypt_record",
    "laplace_sample",
    "observed_range",
    "pseudonymize_column",
    "pseudonymize_ssn",
    "read_registry",
    "sha256_digest",
    "write_registry",
]
