from django.db import models


class TimestampModel(models.Model):
    """
    A base abstract model that provides the creation and last update times of a model instance.
    """
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        abstract = True


class ArtifactModel(TimestampModel):
    """
    Abstract base for rows that point at a file written by the pipeline.

    Attributes:
    - path (str): location of the artifact on disk.
    - sha256 (str): content hash recorded when the row was written.
    """
    path = models.CharField(max_length=1024, help_text="Location of the artifact on disk.")
    sha256 = models.CharField(max_length=64, blank=True, help_text="Content hash of the artifact.")

    class Meta:
        abstract = True
