#include <stdio.h>
#include "dipvae.h"

int main(void) {
  DvDataset *ds = NULL;
  if (dv_dataset_generate(4, 4, 2, 4, 8, 0, &ds) != DV_STATUS_OK) {
    fprintf(stderr, "%s\n", dv_last_error());
    return 1;
  }
  size_t n = dv_dataset_len(ds);
  DvStatus st = dv_dataset_generate(0, 4, 2, 4, 8, 0, NULL);
  dv_dataset_free(ds);
  printf("%zu %d\n", n, (int)st);
  return n == 384 && st == DV_STATUS_NULL_POINTER ? 0 : 2;
}
