#ifndef ARCHSKETCH_H
#define ARCHSKETCH_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result of every fallible call.
 */
typedef enum ArchStatus {
  ARCH_STATUS_OK = 0,
  ARCH_STATUS_NULL_ARGUMENT = 1,
  ARCH_STATUS_INVALID_ARGUMENT = 2,
  ARCH_STATUS_IO = 3,
  ARCH_STATUS_NOT_FOUND = 4,
  ARCH_STATUS_PIPELINE = 5,
  ARCH_STATUS_BUFFER_TOO_SMALL = 6,
  ARCH_STATUS_PANIC = 7,
} ArchStatus;

/*
 A loaded component index.
 */
typedef struct ArchIndex ArchIndex;

/*
 A loaded diffusion checkpoint.
 */
typedef struct ArchModel ArchModel;

/*
 One refinement session.
 */
typedef struct ArchWorkspace ArchWorkspace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version, a static NUL-terminated string.
 */
const char *arch_version(void);

/*
 Copies the calling thread's last error message (NUL-terminated) into
 `buf` and returns the length without the NUL. With a null or short
 buffer nothing is written and the required length is still returned.

 # Safety
 `buf` is null or valid for `cap` bytes.
 */
uintptr_t arch_last_error_message(char *buf, uintptr_t cap);

/*
 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum ArchStatus arch_index_load(const char *path, struct ArchIndex **out);

/*
 Number of components in the index (0 for null).

 # Safety
 `index` is null or a live handle.
 */
uintptr_t arch_index_len(const struct ArchIndex *index);

/*
 # Safety
 `index` is null or a handle not yet freed.
 */
void arch_index_free(struct ArchIndex *index);

/*
 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum ArchStatus arch_model_load(const char *path, struct ArchModel **out);

/*
 Square resolution the model generates at (0 for null).

 # Safety
 `model` is null or a live handle.
 */
uintptr_t arch_model_resolution(const struct ArchModel *model);

/*
 # Safety
 `model` is null or a handle not yet freed.
 */
void arch_model_free(struct ArchModel *model);

/*
 Starts a session from a row-major ink mask (`nonzero` = ink).

 # Safety
 `ink` is valid for `width * height` bytes; `out` is writable.
 */
enum ArchStatus arch_workspace_new(uintptr_t width,
                                   uintptr_t height,
                                   const uint8_t *ink,
                                   struct ArchWorkspace **out);

/*
 Starts a session from a PNG or PGM file, binarized.

 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum ArchStatus arch_workspace_load(const char *path, struct ArchWorkspace **out);

/*
 # Safety
 `ws` is null or a handle not yet freed.
 */
void arch_workspace_free(struct ArchWorkspace *ws);

/*
 Segments with a JSON prompt such as
 `{"points":[{"x":3,"y":4,"label":"foreground"}],"boxes":[]}`.

 # Safety
 `ws` is a live handle, `prompt_json` a NUL-terminated string and
 `out_region` writable.
 */
enum ArchStatus arch_workspace_segment(struct ArchWorkspace *ws,
                                       const char *prompt_json,
                                       uintptr_t *out_region);

/*
 Ranks components for a region. Up to `capacity` ids and similarities are
 written; `out_count` receives how many.

 # Safety
 Handles are live; `query` is NUL-terminated; `out_ids` and `out_sims` are
 valid for `capacity` elements; `out_count` is writable.
 */
enum ArchStatus arch_workspace_retrieve(struct ArchWorkspace *ws,
                                        const struct ArchIndex *index,
                                        uintptr_t region,
                                        const char *query,
                                        uintptr_t top_k,
                                        uint64_t *out_ids,
                                        double *out_sims,
                                        uintptr_t capacity,
                                        uintptr_t *out_count);

/*
 Composites a component offered by the last retrieval for `region`.

 # Safety
 Handles are live.
 */
enum ArchStatus arch_workspace_compose(struct ArchWorkspace *ws,
                                       const struct ArchIndex *index,
                                       uintptr_t region,
                                       uint64_t component_id);

/*
 Restores the sketch from before the last compose.

 # Safety
 `ws` is a live handle.
 */
enum ArchStatus arch_workspace_undo(struct ArchWorkspace *ws);

/*
 Renders the detailed sketch with the model.

 # Safety
 Handles are live; `prompt` is NUL-terminated.
 */
enum ArchStatus arch_workspace_generate(struct ArchWorkspace *ws,
                                        const struct ArchModel *model,
                                        const char *prompt,
                                        uintptr_t steps,
                                        uint64_t seed);

/*
 PNG bytes of a session image: `rough.png`, `detailed.png`, `render.png`
 or `region-<id>.png`.

 # Safety
 `ws` is live; `name` is NUL-terminated; `buf` is null or valid for `cap`
 bytes; `out_len` is writable.
 */
enum ArchStatus arch_workspace_image_png(const struct ArchWorkspace *ws,
                                         const char *name,
                                         uint8_t *buf,
                                         uintptr_t cap,
                                         uintptr_t *out_len);

/*
 PSNR in dB between two planar images (identical images give 100).

 # Safety
 `a` and `b` are valid for `width * height * channels` doubles; `out` is
 writable.
 */
enum ArchStatus arch_psnr(const double *a,
                          const double *b,
                          uintptr_t width,
                          uintptr_t height,
                          uintptr_t channels,
                          double max_value,
                          double *out);

/*
 Mean SSIM between two planar images with samples in `[0, 1]`.

 # Safety
 As for [`arch_psnr`].
 */
enum ArchStatus arch_ssim(const double *a,
                          const double *b,
                          uintptr_t width,
                          uintptr_t height,
                          uintptr_t channels,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARCHSKETCH_H */
