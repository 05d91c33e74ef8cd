#include <stdio.h>
#include "qlspde.h"

int main(void) {
    QlConfig *cfg = NULL;
    QlField *field = NULL;
    double x[2] = {0.0, 0.0};
    double u = 0.0;

    if (ql_config_default(&cfg) != QL_STATUS_OK || ql_solve(cfg, &field) != QL_STATUS_OK) {
        fprintf(stderr, "error: %s\n", ql_last_error());
        return 1;
    }
    ql_field_value(field, 0.5, x, 2, &u);
    printf("qlspde %s: u(0.5, 0) = %.6f\n", ql_version(), u);
    ql_field_free(field);
    ql_config_free(cfg);
    return 0;
}
