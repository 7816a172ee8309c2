import os
from pathlib import Path
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-dwl-lab-local-only')
DEBUG = os.getenv('DEBUG', 'False').lower() == 'true'
ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'rest_framework',
    'adaptation',
]

# Experiments never touch a database; results are files under the output dir.
DATABASES = {}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# Logging
DWL_LOG_LEVEL = os.getenv('DWL_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'adaptation': {
            'handlers': ['console'],
            'level': DWL_LOG_LEVEL,
            'propagate': False,
        },
    },
}

# Defaults for the experiment commands
DWL_OUTPUT_ROOT = os.getenv('DWL_OUTPUT_ROOT', 'runs')
DWL_ABLATION_WORKERS = int(os.getenv('DWL_ABLATION_WORKERS', 1))
