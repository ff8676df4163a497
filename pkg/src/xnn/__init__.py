"""Feature obfuscation against identity leakage: keyed obfuscation (XNN), adversarial
noise with distillation (XNN-d), leakage metrics and attacks, at desk scale."""

__version__ = "0.1.0"
