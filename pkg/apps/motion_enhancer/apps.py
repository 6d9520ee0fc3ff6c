from django.apps import AppConfig


class MotionEnhancerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.motion_enhancer'
