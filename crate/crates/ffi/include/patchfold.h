#ifndef PATCHFOLD_H
#define PATCHFOLD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. 2, 3 and 4 match the command-line exit codes.
typedef enum PfStatus {
  PF_STATUS_OK = 0,
  PF_STATUS_NULL_ARGUMENT = 1,
  PF_STATUS_CONFIG = 2,
  PF_STATUS_RUNTIME = 3,
  PF_STATUS_DETECTOR_UNREACHABLE = 4,
  PF_STATUS_INVALID_ARGUMENT = 5,
  PF_STATUS_IO = 6,
  PF_STATUS_FORMAT = 7,
  PF_STATUS_PANIC = 8,
} PfStatus;

// A fitted eigenpatch basis.
typedef struct PfEigenBasis PfEigenBasis;

// A loaded or generated set of patches.
typedef struct PfPatchSet PfPatchSet;

// One scored detection. Detections and ground truth are matched by
// `image`.
typedef struct PfDetection {
  uint64_t image;
  // x1, y1, x2, y2 in pixels.
  double bbox[4];
  double score;
} PfDetection;

typedef struct PfGroundTruth {
  uint64_t image;
  double bbox[4];
} PfGroundTruth;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer
// stays valid until the next call on the same thread.
const char *pf_last_error(void);

// Library version as a static NUL-terminated string.
const char *pf_version(void);

// Loads the patches listed in `manifest`, resolving names against `dir`.
// `manifest` may be NULL for `<dir>/manifest.json`.
enum PfStatus pf_patch_set_load(const char *dir, const char *manifest, struct PfPatchSet **out);

// Synthetic labelled set of `5 * per_group` RGB patches.
enum PfStatus pf_patch_set_synthetic(size_t per_group,
                                     size_t height,
                                     size_t width,
                                     uint64_t seed,
                                     struct PfPatchSet **out);

enum PfStatus pf_patch_set_len(const struct PfPatchSet *set, size_t *out);

// Values per patch (channels × height × width).
enum PfStatus pf_patch_set_dim(const struct PfPatchSet *set, size_t *out);

void pf_patch_set_free(struct PfPatchSet *set);

enum PfStatus pf_pca_fit(const struct PfPatchSet *set, size_t k, struct PfEigenBasis **out);

// Reads a basis written by `patchfold fit-pca` or [`pf_pca_save`].
enum PfStatus pf_pca_load(const char *dir, struct PfEigenBasis **out);

enum PfStatus pf_pca_save(const struct PfEigenBasis *basis, const char *dir);

enum PfStatus pf_pca_k(const struct PfEigenBasis *basis, size_t *out);

// Writes the `k` weights of patch `index` into `weights[0..len]`;
// `len` must equal `k`.
enum PfStatus pf_pca_encode(const struct PfEigenBasis *basis,
                            const struct PfPatchSet *set,
                            size_t index,
                            double *weights,
                            size_t len);

// Decodes `k` weights into a clamped patch written channel-major to
// `values[0..len]`.
enum PfStatus pf_pca_decode(const struct PfEigenBasis *basis,
                            const double *weights,
                            size_t k,
                            float *values,
                            size_t len);

void pf_pca_free(struct PfEigenBasis *basis);

// Single-class average precision at IoU threshold `iou` with 101-point
// interpolation.
enum PfStatus pf_average_precision(const struct PfDetection *detections,
                                   size_t n_detections,
                                   const struct PfGroundTruth *truths,
                                   size_t n_truths,
                                   double iou,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATCHFOLD_H */
