"""
URL configuration for motion_transfer.

Only the admin is routed; it is used to browse recorded run manifests.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    # Admin URLs
    path('admin/', admin.site.urls),
]
