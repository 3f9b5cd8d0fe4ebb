#include "dpm.h"

/* Compiled by the header test: every declaration must be usable from C. */
int smoke(const char *path) {
    DpmDataset *data = NULL;
    DpmModel *model = NULL;
    double params[8];
    size_t len = 0;
    char message[256];
    if (dpm_dataset_load(path, NULL, &data) != DPM_STATUS_OK) {
        dpm_last_error_message(message, sizeof message);
        return 1;
    }
    double init[4] = {-3.0, 0.5, 0.2, 0.4};
    enum DpmStatus status = dpm_model_from_params(1, 1, init, &model);
    if (status == DPM_STATUS_OK) {
        status = dpm_model_params(model, NULL, params, 8, &len);
    }
    dpm_model_free(model);
    dpm_dataset_free(data);
    return status == DPM_STATUS_OK && len == 4 ? 0 : 2;
}

int main(int argc, char **argv) {
    return argc > 1 ? smoke(argv[1]) : 3;
}
