"""
Django settings for the motion_transfer project.

Full-scale and desk-scale defaults for the pipeline live in
``MOTION_TRANSFER``. Run configs and command-line flags override them; see
``apps.runs.manifest`` for how the layers are recorded.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Working directory for the database, caches and run records.
MOTION_TRANSFER_HOME = Path(os.environ.get('MOTION_TRANSFER_HOME', BASE_DIR / '.motion_transfer'))
MOTION_TRANSFER_HOME.mkdir(parents=True, exist_ok=True)


# SECURITY WARNING: nothing here is served over HTTP outside the admin.
SECRET_KEY = os.environ.get('MOTION_TRANSFER_SECRET_KEY', 'motion-transfer-local-only-not-a-secret')

DEBUG = os.environ.get('MOTION_TRANSFER_DEBUG', '0') == '1'

ALLOWED_HOSTS = ['localhost', '127.0.0.1']


# Application definition

INSTALLED_APPS = [
    'django.contrib.admin',
    'django.contrib.auth',
    'django.contrib.contenttypes',
    'django.contrib.sessions',
    'django.contrib.messages',
    'django.contrib.staticfiles',

    # apps
    'apps.core.apps.CoreConfig',
    'apps.backbone.apps.BackboneConfig',
    'apps.adapters.apps.AdaptersConfig',
    'apps.appearance.apps.AppearanceConfig',
    'apps.motion_enhancer.apps.MotionEnhancerConfig',
    'apps.training.apps.TrainingConfig',
    'apps.sampling.apps.SamplingConfig',
    'apps.eval.apps.EvalConfig',
    'apps.data.apps.DataConfig',
    'apps.runs.apps.RunsConfig',

    # packages
    'rest_framework',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.contrib.sessions.middleware.SessionMiddleware',
    'django.middleware.common.CommonMiddleware',
    'django.middleware.csrf.CsrfViewMiddleware',
    'django.contrib.auth.middleware.AuthenticationMiddleware',
    'django.contrib.messages.middleware.MessageMiddleware',
    'django.middleware.clickjacking.XFrameOptionsMiddleware',
]

ROOT_URLCONF = 'motion_transfer.urls'

TEMPLATES = [
    {
        'BACKEND': 'django.template.backends.django.DjangoTemplates',
        'DIRS': [],
        'APP_DIRS': True,
        'OPTIONS': {
            'context_processors': [
                'django.template.context_processors.debug',
                'django.template.context_processors.request',
                'django.contrib.auth.context_processors.auth',
                'django.contrib.messages.context_processors.messages',
            ],
        },
    },
]


# Database
# Run manifests are indexed here; the JSON manifest files stay authoritative.

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': MOTION_TRANSFER_HOME / 'db.sqlite3',
    }
}


LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

STATIC_URL = 'static/'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'timestamped': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'timestamped',
        },
    },
    'loggers': {
        'apps': {
            'handlers': ['console'],
            'level': os.environ.get('MOTION_TRANSFER_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}


# Pipeline defaults

MOTION_TRANSFER = {
    'BACKBONE': {
        'SEED': 20240521,
        'ARCHIVE': os.environ.get('MOTION_TRANSFER_BACKBONE_ARCHIVE', ''),
        'MODEL_WIDTH': 64,
        'CHANNEL_MULT': (1, 2),
        'HEADS': 4,
        'LATENT_CHANNELS': 4,
        'DOWNSAMPLE': 4,
        'TEXT_DIM': 32,
        'MAX_TOKENS': 32,
        'VOCAB_SIZE': 4096,
        'FRAMES': 8,
        'HEIGHT': 32,
        'WIDTH': 32,
        'TIMESTEPS': 1000,
        'BETA_START': 1e-4,
        'BETA_END': 2e-2,
    },
    'TRAIN': {
        'lora_rank': 32,
        'lora_alpha': None,
        'learning_rate': 5e-4,
        'max_steps': 600,
        'lambda_reg': 1e-4,
        'batch_size': 1,
        'seed': 0,
        'frames_per_sample': 8,
        'null_prompt_probability': 0.1,
        'weight_decay': 1e-2,
        'max_grad_norm': 1.0,
        'log_every': 25,
        'use_recaptioner': True,
        'use_injector': True,
        'use_enhancer': True,
        'full_temporal_finetune': False,
        'verb_index': None,
    },
    'SAMPLE': {
        'num_steps': 30,
        'guidance_scale': 12.0,
        'eta': 0.0,
        'frames': 8,
        'fps': 8.0,
        'seed': 0,
        'height': None,
        'width': None,
    },
    # Sampling defaults of the full-size model, applied by --full-scale. Without
    # it the desk backbone samples at the sizes in BACKBONE.
    'FULL_SCALE': {
        'FRAMES': 24,
        'FPS': 8.0,
        'WIDTH': 576,
        'HEIGHT': 320,
    },
    'RECAPTIONER': {
        'BACKEND': os.environ.get('MOTION_TRANSFER_RECAPTIONER', 'mock'),
        'ENDPOINT': os.environ.get('MOTION_TRANSFER_RECAPTIONER_URL', 'http://127.0.0.1:8765/recaption'),
        'TIMEOUT': float(os.environ.get('MOTION_TRANSFER_RECAPTIONER_TIMEOUT', '30')),
        'RETRIES': 3,
        'FALLBACK_BUDGET': 2,
        'INSTRUCTION': BASE_DIR / 'apps' / 'appearance' / 'assets' / 'recaption_instruction.txt',
    },
    'PROVIDERS': {
        'IMAGE': os.environ.get('MOTION_TRANSFER_IMAGE_PROVIDER', 'toy'),
        'CLIP_MODEL': os.environ.get('MOTION_TRANSFER_CLIP_MODEL', 'laion/CLIP-ViT-H-14-laion2B-s32B-b79K'),
        'VIDEO_MODEL': os.environ.get('MOTION_TRANSFER_VIDEO_MODEL', 'MCG-NJU/videomae-base'),
    },
    'TAGGER': {
        'BACKEND': os.environ.get('MOTION_TRANSFER_TAGGER', 'rule'),
        'SPACY_MODEL': os.environ.get('MOTION_TRANSFER_SPACY_MODEL', 'en_core_web_sm'),
    },
    'CACHE_DIR': Path(os.environ.get('MOTION_TRANSFER_CACHE_DIR', MOTION_TRANSFER_HOME / 'cache')),
    'RUNS_DIR': MOTION_TRANSFER_HOME / 'runs',
}
