#include <math.h>
#include <stdio.h>
#include <stdlib.h>

#include "splatcal.h"

#define CHECK(call)                                                         \
  do {                                                                      \
    SplatcalStatus s_ = (call);                                             \
    if (s_ != SPLATCAL_STATUS_OK) {                                         \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,               \
              splatcal_last_error());                                       \
      return 1;                                                             \
    }                                                                       \
  } while (0)

int main(void) {
  SplatcalScene *scene = NULL;
  SplatcalCameras *cams = NULL;
  SplatcalImage *im = NULL;
  CHECK(splatcal_scene_synth(1, 100, "cloud", &scene));
  CHECK(splatcal_cameras_synth(scene, 2, 2, "orbit", 16, 12, &cams));
  CHECK(splatcal_render(scene, cams, 0, NULL, &im));

  uint32_t w = 0, h = 0;
  CHECK(splatcal_image_size(im, &w, &h));
  double *px = malloc(sizeof(double) * 3 * w * h);
  CHECK(splatcal_image_read_pixels(im, px, 3 * (size_t)w * h));
  double sum = 0.0;
  for (size_t i = 0; i < 3 * (size_t)w * h; i++) sum += px[i];

  double grad[9];
  CHECK(splatcal_grad_camera(scene, cams, 0, im, NULL, grad));

  if (splatcal_scene_synth(1, 0, "cloud", &scene) != SPLATCAL_STATUS_CONFIG) return 2;
  printf("%s %ux%u %.6f %zu\n", splatcal_version(), w, h, sum, splatcal_scene_len(scene));

  free(px);
  splatcal_image_free(im);
  splatcal_cameras_free(cams);
  splatcal_scene_free(scene);
  return isfinite(sum) ? 0 : 3;
}
