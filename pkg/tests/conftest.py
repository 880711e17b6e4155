import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None)
settings.load_profile("default")

FIGURE3_XML = """<annotation>
  <folder>image/folder</folder>
  <filename>car-wbs-HR11F7575_00000_10e.jpg</filename>
  <path>image/folder/car-wbs-HR11F7575_00000_10e.jpg</path>
  <source>
    <database>unknown</database>
  </source>
  <size>
    <width>540</width>
    <height>720</height>
    <depth>3</depth>
  </size>
  <segmented>0</segmented>
  <object>
    <name>HR11F7575</name>
    <pose>unspecified</pose>
    <truncated>0</truncated>
    <difficult>0</difficult>
    <bndbox>
      <xmin>186</xmin>
      <ymin>344</ymin>
      <xmax>348</xmax>
      <ymax>385</ymax>
    </bndbox>
  </object>
</annotation>
"""


@pytest.fixture
def figure3_xml():
    return FIGURE3_XML
