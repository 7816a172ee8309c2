import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'dwl_lab.settings')
django.setup()
