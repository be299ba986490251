"""
Django settings for the antithetic_lab project.

The project is driven from manage.py: every experiment is a management command
(correlation, uq, qmc_tradeoff, symmetry, ou, fkg). Nothing is served over HTTP.

Environment variables are read with python-decouple, see README.md for the list.
"""

from pathlib import Path

import dj_database_url
from decouple import config

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = config("SECRET_KEY", default="django-insecure-antithetic-lab-local-only")

DEBUG = config("DEBUG", default=True, cast=bool)

ALLOWED_HOSTS = config("ALLOWED_HOSTS", default="localhost,127.0.0.1").split(",")


# Application definition

INSTALLED_APPS = [
    "django.contrib.auth",
    "django.contrib.contenttypes",
    # Third-party apps
    "rest_framework",
    # Local apps
    "sampling",
    "analysis",
    "experiments",
]


# Database
# The run ledger lives in SQLite unless DATABASE_URL points elsewhere.

DATABASE_URL = config("DATABASE_URL", default="")

if DATABASE_URL and not DATABASE_URL.startswith("<"):
    DATABASES = {"default": dj_database_url.parse(DATABASE_URL, conn_max_age=600)}
else:
    DATABASES = {
        "default": {
            "ENGINE": "django.db.backends.sqlite3",
            "NAME": BASE_DIR / "db.sqlite3",
        }
    }


# Internationalization

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True


DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Experiment harness

LAB_OUTPUT_DIR = Path(config("LAB_OUTPUT_DIR", default=str(BASE_DIR / "runs")))

# Default worker count for replicate/pair/probe sweeps (overridden by --threads)
LAB_THREADS = config("LAB_THREADS", default=1, cast=int)

# Noise rows handed to the sampler per chunk; bounds trajectory memory
LAB_CHUNK_SIZE = config("LAB_CHUNK_SIZE", default=256, cast=int)

LAB_LOG_LEVEL = config("LAB_LOG_LEVEL", default="INFO")


# Logging

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "simple": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "simple"},
    },
    "loggers": {
        app: {"handlers": ["console"], "level": LAB_LOG_LEVEL, "propagate": False}
        for app in ("sampling", "analysis", "experiments")
    },
}
