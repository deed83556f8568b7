#ifndef DGBS_H
#define DGBS_H

#include <stddef.h>
#include <stdint.h>

/*
 Result codes.
 */
typedef enum DgbsStatus {
  DGBS_STATUS_OK = 0,
  DGBS_STATUS_NULL_POINTER = 1,
  DGBS_STATUS_CONFIG = 2,
  DGBS_STATUS_DIMENSION = 3,
  DGBS_STATUS_UNPHYSICAL = 4,
  DGBS_STATUS_ILL_CONDITIONED = 5,
  DGBS_STATUS_INVALID_ARGUMENT = 6,
  DGBS_STATUS_BUDGET = 7,
  DGBS_STATUS_TRUNCATION = 8,
  DGBS_STATUS_IO = 9,
  DGBS_STATUS_PARSE = 10,
  DGBS_STATUS_PANIC = 11,
} DgbsStatus;

/*
 Reconstructed kernel.
 */
typedef struct DgbsReconstruction DgbsReconstruction;

/*
 Output state of a source and circuit.
 */
typedef struct DgbsState DgbsState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. Valid until the
 next call into the library on this thread.
 */
const char *dgbs_last_error(void);

/*
 Library version, static storage.
 */
const char *dgbs_version(void);

/*
 Releases a string returned by the library.

 # Safety
 `s` must come from this library and not be freed twice.
 */
void dgbs_string_free(char *s);

/*
 Builds a state from `{"source": {...}, "transfer": {"t": matrix}}`.

 # Safety
 `json` must be a nul-terminated string; `out` must be writable.
 */
enum DgbsStatus dgbs_state_from_json(const char *json, struct DgbsState **out);

/*
 # Safety
 `state` must come from [`dgbs_state_from_json`] and not be freed twice.
 */
void dgbs_state_free(struct DgbsState *state);

/*
 Number of output modes; 0 for a null handle.

 # Safety
 `state` must be null or a live handle.
 */
size_t dgbs_state_modes(const struct DgbsState *state);

/*
 Probability of the photon-number pattern `counts[0..len]` under `model`
 (`"full"`, `"korder:K"`, `"squeezer_only"`, `"classical"`).

 # Safety
 `counts` must point to `len` values; `model` must be nul-terminated;
 `out` must be writable.
 */
enum DgbsStatus dgbs_pattern_probability(const struct DgbsState *state,
                                         const uint32_t *counts,
                                         size_t len,
                                         const char *model,
                                         double *out);

/*
 Total variation distance of two distributions of length `n`.

 # Safety
 `p` and `q` must point to `n` values; `out` must be writable.
 */
enum DgbsStatus dgbs_tvd(const double *p, const double *q, size_t n, double *out);

/*
 Reconstructs from a records CSV. `options_json` may be null for defaults.

 # Safety
 String arguments must be null or nul-terminated; `out` must be writable.
 */
enum DgbsStatus dgbs_reconstruct_csv(const char *path,
                                     const char *options_json,
                                     struct DgbsReconstruction **out);

/*
 # Safety
 `r` must come from [`dgbs_reconstruct_csv`] and not be freed twice.
 */
void dgbs_reconstruction_free(struct DgbsReconstruction *r);

/*
 Number of modes of a reconstruction; 0 for a null handle.

 # Safety
 `r` must be null or a live handle.
 */
size_t dgbs_reconstruction_modes(const struct DgbsReconstruction *r);

/*
 1 when the reconstructed kernel is a valid state, 0 otherwise.

 # Safety
 `r` must be null or a live handle.
 */
int32_t dgbs_reconstruction_is_physical(const struct DgbsReconstruction *r);

/*
 Copies the real first-input response `γ` into `out[0..len]`; `len` must
 equal the mode count.

 # Safety
 `out` must point to `len` writable values.
 */
enum DgbsStatus dgbs_reconstruction_gamma(const struct DgbsReconstruction *r,
                                          double *out,
                                          size_t len);

/*
 Full result as JSON; release with [`dgbs_string_free`].

 # Safety
 `out` must be writable.
 */
enum DgbsStatus dgbs_reconstruction_to_json(const struct DgbsReconstruction *r, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DGBS_H */
