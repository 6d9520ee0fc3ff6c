from django.apps import AppConfig


class EvalConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.eval'
    label = 'motion_eval'
