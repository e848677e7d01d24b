"""
Column layout of every CSV report kind.
"""

REPORT_HEADERS = {
    "spectral": ["layer", "sigma_pre", "sigma_delta", "ratio", "max_cosine"],
    "metrics": ["method", "seed", "s", "ca", "asr", "delta"],
    "rho": ["seed", "kind", "rho_bd", "rho_cl", "rho_tr", "rho_eff", "s_star"],
    "proposition": [
        "instances", "violations", "proof_violations", "early_positive",
        "s_star_q05", "s_star_q50", "s_star_q95",
    ],
    "sweep": ["method", "seed", "axis", "value", "s", "ca", "asr", "delta"],
    "ablation": ["cell", "seed", "cl", "tr", "pt", "ca", "asr", "delta"],
}

SUMMARY_FILE = "summary.json"
RESOLVED_CONFIG_FILE = "resolved_config.json"


def report_file(kind: str) -> str:
    return f"{kind}.csv"
