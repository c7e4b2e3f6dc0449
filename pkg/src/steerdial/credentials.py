from __future__ import annotations

import functools
import os
from pathlib import Path
from typing import Dict, Optional

from .consts import TOKEN_ENV_VAR


@functools.lru_cache
def load_from_dotenv(dotenv_path: Optional[str | Path] = None) -> Dict[str, Optional[str]]:
    """Load key-value pairs from a .env file without touching os.environ
    :param dotenv_path: path to .env file. Defaults to the nearest .env found from the working directory
    :return: dict of kv pairs {str: str|None}
    """
    from dotenv import dotenv_values, find_dotenv
    path = dotenv_path or find_dotenv(usecwd=True)
    if not path:
        return {}
    return dict(dotenv_values(path))


def service_token(dotenv_path: Optional[str | Path] = None, env_var: str = TOKEN_ENV_VAR) -> Optional[str]:
    """Resolve the commonsense service token. The process environment wins over the .env file
    :param dotenv_path: optional explicit .env path
    :param env_var: variable holding the token
    :return: token, or None when the service is unauthenticated
    """
    return os.environ.get(env_var) or load_from_dotenv(dotenv_path).get(env_var) or None
